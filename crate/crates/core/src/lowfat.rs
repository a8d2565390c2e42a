//! A simulated 64-bit address space with a low-fat allocator.
//!
//! Region `i + 1` (each `region_size` bytes) serves size class `i`, and every
//! slot is aligned to its class size, so the base and size of any interior
//! address follow from the address alone. Region 0 (holding NULL) and
//! everything from `legacy_base` upwards are legacy memory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const PAGE: u64 = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HeapError {
    #[error("invalid address space configuration: {0}")]
    Config(String),
    #[error("out of memory in the {class}-byte class")]
    OutOfMemory { class: u64 },
    #[error("out of legacy memory")]
    LegacyExhausted,
    #[error("{0:#x} is not a low-fat allocation")]
    NotManaged(u64),
    #[error("{0:#x} is not an allocation base")]
    NotBase(u64),
    #[error("{0:#x} is not a live allocation")]
    NotLive(u64),
    #[error("access to unmapped memory at {addr:#x} ({width} bytes)")]
    Unmapped { addr: u64, width: u64 },
    #[error("unsupported access width {0}")]
    BadWidth(u64),
    #[error("unknown stack frame {0}")]
    UnknownFrame(u32),
}

/// An address range `[lo, hi]`: accesses must lie in `lo..hi`, while `hi`
/// itself is a valid one-past-the-end address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AbsBounds {
    pub lo: u64,
    pub hi: u64,
}

impl AbsBounds {
    pub const WIDE: AbsBounds = AbsBounds { lo: 0, hi: u64::MAX };

    pub fn new(lo: u64, hi: u64) -> Self {
        debug_assert!(lo <= hi, "bounds {lo:#x}..{hi:#x}");
        AbsBounds { lo, hi }
    }

    pub fn empty_at(addr: u64) -> Self {
        AbsBounds { lo: addr, hi: addr }
    }

    pub fn is_wide(&self) -> bool {
        *self == Self::WIDE
    }

    pub fn width(&self) -> u64 {
        self.hi - self.lo
    }

    /// Interval intersection; disjoint ranges collapse to an empty range at
    /// `other.lo`.
    pub fn intersect(&self, other: AbsBounds) -> AbsBounds {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        if lo <= hi {
            AbsBounds { lo, hi }
        } else {
            AbsBounds::empty_at(other.lo)
        }
    }

    /// `[addr, addr + width]` lies within the bounds.
    pub fn contains_range(&self, addr: u64, width: u64) -> bool {
        match addr.checked_add(width) {
            Some(end) => addr >= self.lo && end <= self.hi,
            None => false,
        }
    }

    /// `addr` is in `[lo, hi]`, end inclusive.
    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.lo && addr <= self.hi
    }

    pub fn contains_bounds(&self, other: AbsBounds) -> bool {
        other.lo >= self.lo && other.hi <= self.hi
    }
}

impl fmt::Display for AbsBounds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_wide() {
            write!(f, "WIDE")
        } else {
            write!(f, "{:#x}..{:#x}", self.lo, self.hi)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceConfig {
    /// Bytes per size-class region; a power of two.
    pub region_size: u64,
    /// Ascending power-of-two size classes, each at most `region_size`.
    pub classes: Vec<u64>,
    /// Start of the unmanaged region; defaults to just past the last class
    /// region.
    pub legacy_base: Option<u64>,
    /// Randomizes where allocation starts inside each region.
    pub seed: u64,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        SpaceConfig { region_size: 1 << 32, classes: (4..=32).map(|s| 1u64 << s).collect(), legacy_base: None, seed: 0 }
    }
}

impl SpaceConfig {
    pub fn with_seed(seed: u64) -> Self {
        SpaceConfig { seed, ..Default::default() }
    }

    fn validate(&self) -> Result<u64, HeapError> {
        let bad = |m: String| Err(HeapError::Config(m));
        if !self.region_size.is_power_of_two() {
            return bad(format!("region size {} is not a power of two", self.region_size));
        }
        if self.classes.is_empty() {
            return bad("no size classes".into());
        }
        for w in self.classes.windows(2) {
            if w[0] >= w[1] {
                return bad("size classes must be strictly ascending".into());
            }
        }
        for &c in &self.classes {
            if !c.is_power_of_two() || c < 16 || c > self.region_size {
                return bad(format!("size class {c} must be a power of two in 16..={}", self.region_size));
            }
        }
        let managed_end = (self.classes.len() as u128 + 1) * self.region_size as u128;
        if managed_end >= u64::MAX as u128 {
            return bad("managed regions exceed the address space".into());
        }
        let legacy = self.legacy_base.unwrap_or(managed_end as u64);
        if (legacy as u128) < managed_end {
            return bad(format!("legacy base {legacy:#x} overlaps the managed regions"));
        }
        Ok(legacy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotState {
    Live,
    Free,
    Legacy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameId(pub u32);

#[derive(Debug, Clone)]
struct Region {
    class: u64,
    start: u64,
    end: u64,
    next: u64,
    free: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct AddressSpace {
    region_size: u64,
    region_shift: u32,
    regions: Vec<Region>,
    legacy_base: u64,
    legacy_next: u64,
    /// Mapped legacy ranges, keyed by start.
    legacy_maps: BTreeMap<u64, u64>,
    live: HashSet<u64>,
    frames: Vec<(FrameId, Vec<u64>)>,
    next_frame: u32,
    pages: BTreeMap<u64, Box<[u8; PAGE as usize]>>,
    requested: HashMap<u64, u64>,
}

impl AddressSpace {
    pub fn new(config: &SpaceConfig) -> Result<Self, HeapError> {
        let legacy_base = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let regions = config
            .classes
            .iter()
            .enumerate()
            .map(|(i, &class)| {
                let start = (i as u64 + 1) * config.region_size;
                let slots = config.region_size / class;
                // Skip up to 1/16th of the region, never below one slot left.
                let skip = if slots > 16 { rng.random_range(0..slots / 16) } else { 0 };
                Region { class, start, end: start + config.region_size, next: start + skip * class, free: Vec::new() }
            })
            .collect();
        Ok(AddressSpace {
            region_size: config.region_size,
            region_shift: config.region_size.trailing_zeros(),
            regions,
            legacy_base,
            legacy_next: legacy_base.saturating_add(PAGE),
            legacy_maps: BTreeMap::new(),
            live: HashSet::new(),
            frames: Vec::new(),
            next_frame: 0,
            pages: BTreeMap::new(),
            requested: HashMap::new(),
        })
    }

    pub fn region_size(&self) -> u64 {
        self.region_size
    }

    pub fn legacy_base(&self) -> u64 {
        self.legacy_base
    }

    pub fn largest_class(&self) -> u64 {
        self.regions.last().map_or(0, |r| r.class)
    }

    pub fn class_for(&self, size: u64) -> Option<u64> {
        self.regions.iter().map(|r| r.class).find(|&c| c >= size)
    }

    fn region_of(&self, addr: u64) -> Option<&Region> {
        let idx = addr >> self.region_shift;
        if idx == 0 {
            return None;
        }
        self.regions.get(idx as usize - 1)
    }

    /// Allocation base of `addr`, or `None` for legacy addresses.
    pub fn lf_base(&self, addr: u64) -> Option<u64> {
        self.region_of(addr).map(|r| addr & !(r.class - 1))
    }

    /// Allocation (class) size of `addr`, or `u64::MAX` for legacy addresses.
    pub fn lf_size(&self, addr: u64) -> u64 {
        self.region_of(addr).map_or(u64::MAX, |r| r.class)
    }

    pub fn is_managed(&self, addr: u64) -> bool {
        self.region_of(addr).is_some()
    }

    pub fn slot_state(&self, addr: u64) -> SlotState {
        match self.lf_base(addr) {
            None => SlotState::Legacy,
            Some(b) if self.live.contains(&b) => SlotState::Live,
            Some(_) => SlotState::Free,
        }
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    /// Allocates `size` bytes from the smallest fitting class. Requests
    /// larger than the largest class are served from legacy memory.
    pub fn lf_alloc(&mut self, size: u64) -> Result<u64, HeapError> {
        let size = size.max(1);
        let Some(idx) = self.regions.iter().position(|r| r.class >= size) else {
            return self.legacy_alloc(size);
        };
        let region = &mut self.regions[idx];
        let class = region.class;
        let base = if let Some(b) = region.free.pop() {
            self.clear(b, class);
            b
        } else {
            if region.next >= region.end {
                return Err(HeapError::OutOfMemory { class });
            }
            let b = region.next;
            region.next += class;
            b
        };
        self.live.insert(base);
        self.requested.insert(base, size);
        Ok(base)
    }

    /// Returns a live slot to its class free list. Its bytes stay intact
    /// until the slot is handed out again.
    pub fn lf_free(&mut self, addr: u64) -> Result<(), HeapError> {
        let Some(base) = self.lf_base(addr) else {
            return Err(HeapError::NotManaged(addr));
        };
        if base != addr {
            return Err(HeapError::NotBase(addr));
        }
        if !self.live.remove(&addr) {
            return Err(HeapError::NotLive(addr));
        }
        self.requested.remove(&addr);
        let idx = (addr >> self.region_shift) as usize - 1;
        self.regions[idx].free.push(addr);
        Ok(())
    }

    /// Maps `size` bytes of unmanaged memory, as an uninstrumented library
    /// would.
    pub fn legacy_alloc(&mut self, size: u64) -> Result<u64, HeapError> {
        let size = size.max(1);
        let base = self.legacy_next;
        let end = base.checked_add(size).ok_or(HeapError::LegacyExhausted)?;
        // Leave an unmapped page between mappings.
        self.legacy_next = end.div_ceil(PAGE).saturating_add(1).saturating_mul(PAGE);
        self.legacy_maps.insert(base, end);
        Ok(base)
    }

    fn legacy_mapped(&self, addr: u64, width: u64) -> bool {
        let end = addr.saturating_add(width);
        self.legacy_maps.range(..=addr).next_back().is_some_and(|(_, &hi)| end <= hi)
    }

    fn check_mapped(&self, addr: u64, width: u64) -> Result<(), HeapError> {
        let last = addr.checked_add(width.max(1) - 1).ok_or(HeapError::Unmapped { addr, width })?;
        let managed = match (self.region_of(addr), self.region_of(last)) {
            (Some(a), Some(b)) => a.start == b.start,
            _ => false,
        };
        if managed || self.legacy_mapped(addr, width) {
            Ok(())
        } else {
            Err(HeapError::Unmapped { addr, width })
        }
    }

    fn clear(&mut self, base: u64, len: u64) {
        let first = base / PAGE * PAGE;
        let end = base + len;
        let keys: Vec<u64> = self.pages.range(first..end).map(|(&k, _)| k).collect();
        for k in keys {
            let page = self.pages.get_mut(&k).expect("page present");
            let lo = base.max(k) - k;
            let hi = end.min(k + PAGE) - k;
            page[lo as usize..hi as usize].fill(0);
            if page.iter().all(|&b| b == 0) {
                self.pages.remove(&k);
            }
        }
    }

    pub fn read_bytes(&self, addr: u64, out: &mut [u8]) -> Result<(), HeapError> {
        self.check_mapped(addr, out.len() as u64)?;
        for (i, b) in out.iter_mut().enumerate() {
            let a = addr + i as u64;
            *b = self.pages.get(&(a / PAGE * PAGE)).map_or(0, |p| p[(a % PAGE) as usize]);
        }
        Ok(())
    }

    pub fn write_bytes(&mut self, addr: u64, data: &[u8]) -> Result<(), HeapError> {
        self.check_mapped(addr, data.len() as u64)?;
        for (i, &b) in data.iter().enumerate() {
            let a = addr + i as u64;
            let page = self.pages.entry(a / PAGE * PAGE).or_insert_with(|| Box::new([0; PAGE as usize]));
            page[(a % PAGE) as usize] = b;
        }
        Ok(())
    }

    /// Little-endian load of 1, 2, 4 or 8 bytes.
    pub fn load(&self, addr: u64, width: u64) -> Result<u64, HeapError> {
        if !matches!(width, 1 | 2 | 4 | 8) {
            return Err(HeapError::BadWidth(width));
        }
        let mut buf = [0u8; 8];
        self.read_bytes(addr, &mut buf[..width as usize])?;
        Ok(u64::from_le_bytes(buf))
    }

    pub fn store(&mut self, addr: u64, width: u64, value: u64) -> Result<(), HeapError> {
        if !matches!(width, 1 | 2 | 4 | 8) {
            return Err(HeapError::BadWidth(width));
        }
        self.write_bytes(addr, &value.to_le_bytes()[..width as usize])
    }

    pub fn push_frame(&mut self) -> FrameId {
        let id = FrameId(self.next_frame);
        self.next_frame += 1;
        self.frames.push((id, Vec::new()));
        id
    }

    pub fn stack_alloc(&mut self, frame: FrameId, size: u64) -> Result<u64, HeapError> {
        let pos = self.frames.iter().position(|(f, _)| *f == frame).ok_or(HeapError::UnknownFrame(frame.0))?;
        let addr = self.lf_alloc(size)?;
        self.frames[pos].1.push(addr);
        Ok(addr)
    }

    /// Objects of a frame, most recent first.
    pub fn frame_objects(&self, frame: FrameId) -> Result<Vec<u64>, HeapError> {
        let (_, objs) = self.frames.iter().find(|(f, _)| *f == frame).ok_or(HeapError::UnknownFrame(frame.0))?;
        Ok(objs.iter().rev().copied().collect())
    }

    /// Frees every object of `frame` in LIFO order and forgets the frame.
    /// Returns the freed addresses in the order they were released.
    pub fn stack_release(&mut self, frame: FrameId) -> Result<Vec<u64>, HeapError> {
        let pos = self.frames.iter().position(|(f, _)| *f == frame).ok_or(HeapError::UnknownFrame(frame.0))?;
        let (_, objs) = self.frames.remove(pos);
        let mut released = Vec::with_capacity(objs.len());
        for addr in objs.into_iter().rev() {
            if self.is_managed(addr) {
                self.lf_free(addr)?;
            }
            released.push(addr);
        }
        Ok(released)
    }

    /// SHA-256 over every non-zero page, in address order.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (addr, page) in &self.pages {
            if page.iter().any(|&b| b != 0) {
                h.update(addr.to_le_bytes());
                h.update(&page[..]);
            }
        }
        h.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn space() -> AddressSpace {
        AddressSpace::new(&SpaceConfig::default()).unwrap()
    }

    #[test]
    fn two_allocations_are_aligned_and_disjoint() {
        let mut s = space();
        let a = s.lf_alloc(32).unwrap();
        let b = s.lf_alloc(32).unwrap();
        assert_ne!(a, b);
        assert_eq!(a % 32, 0);
        assert_eq!(b % 32, 0);
        assert!(a.abs_diff(b) >= 32);
        assert_eq!(s.lf_size(a), 32);
    }

    #[test]
    fn smallest_class_is_sixteen() {
        let mut s = space();
        let a = s.lf_alloc(1).unwrap();
        assert_eq!(s.lf_size(a), 16);
    }

    #[test]
    fn interior_base_and_size() {
        let mut s = space();
        let str_ = s.lf_alloc(32).unwrap();
        assert_eq!(s.lf_size(str_ + 10), 32);
        assert_eq!(s.lf_base(str_ + 10), Some(str_));
        assert_eq!(s.lf_base(str_ + 17), Some(str_));
        assert_eq!(s.lf_base(str_), Some(str_));
    }

    #[test]
    fn legacy_addresses() {
        let mut s = space();
        let q = s.legacy_alloc(100).unwrap();
        assert_eq!(s.lf_base(q), None);
        assert_eq!(s.lf_size(q), u64::MAX);
        assert_eq!(s.lf_base(0), None);
        assert_eq!(s.slot_state(q), SlotState::Legacy);
        assert_eq!(s.lf_free(q), Err(HeapError::NotManaged(q)));
    }

    #[test]
    fn oversize_falls_back_to_legacy() {
        let cfg = SpaceConfig { region_size: 1 << 16, classes: vec![16, 32, 64], ..Default::default() };
        let mut s = AddressSpace::new(&cfg).unwrap();
        let q = s.lf_alloc(65).unwrap();
        assert!(!s.is_managed(q));
        s.store(q + 64, 1, 7).unwrap();
    }

    #[test]
    fn free_preserves_bytes_until_reuse() {
        let mut s = space();
        let a = s.lf_alloc(24).unwrap();
        s.store(a, 8, 0xdead_beef).unwrap();
        s.lf_free(a).unwrap();
        assert_eq!(s.slot_state(a), SlotState::Free);
        assert_eq!(s.load(a, 8).unwrap(), 0xdead_beef);
        let b = s.lf_alloc(30).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.load(b, 8).unwrap(), 0);
    }

    #[test]
    fn free_errors() {
        let mut s = space();
        let a = s.lf_alloc(32).unwrap();
        assert_eq!(s.lf_free(a + 4), Err(HeapError::NotBase(a + 4)));
        s.lf_free(a).unwrap();
        assert_eq!(s.lf_free(a), Err(HeapError::NotLive(a)));
    }

    #[test]
    fn loads_and_stores() {
        let mut s = space();
        let a = s.lf_alloc(64).unwrap();
        assert_eq!(s.load(a + 8, 4).unwrap(), 0);
        s.store(a, 4, 0x1234_5678).unwrap();
        assert_eq!(s.load(a, 4).unwrap(), 0x1234_5678);
        s.store(a + 16, 8, 0x1111_2222_3333_4444).unwrap();
        assert_eq!(s.load(a + 16, 4).unwrap(), 0x3333_4444);
        assert_eq!(s.load(a + 20, 4).unwrap(), 0x1111_2222);
        assert_eq!(s.load(a, 3), Err(HeapError::BadWidth(3)));
    }

    #[test]
    fn unmapped_legacy_access_faults() {
        let mut s = space();
        assert!(matches!(s.load(0, 8), Err(HeapError::Unmapped { .. })));
        let q = s.legacy_alloc(16).unwrap();
        assert!(s.load(q + 8, 8).is_ok());
        assert!(matches!(s.load(q + 12, 8), Err(HeapError::Unmapped { .. })));
        assert!(matches!(s.store(s.legacy_base(), 1, 0), Err(HeapError::Unmapped { .. })));
    }

    #[test]
    fn stack_frames_release_in_lifo_order() {
        let mut s = space();
        let f = s.push_frame();
        let a = s.stack_alloc(f, 8).unwrap();
        let b = s.stack_alloc(f, 8).unwrap();
        assert_eq!(s.lf_base(b + 3), Some(b));
        assert_eq!(s.stack_release(f).unwrap(), vec![b, a]);
        assert_eq!(s.slot_state(a), SlotState::Free);
        assert_eq!(s.stack_release(f), Err(HeapError::UnknownFrame(f.0)));
        // LIFO free list hands back the most recently released slot first.
        assert_eq!(s.lf_alloc(8).unwrap(), a);
    }

    #[test]
    fn seeds_change_placement_deterministically() {
        let run = |seed| {
            let mut s = AddressSpace::new(&SpaceConfig::with_seed(seed)).unwrap();
            (0..4).map(|_| s.lf_alloc(40).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn config_validation() {
        let bad = SpaceConfig { classes: vec![16, 24], ..Default::default() };
        assert!(AddressSpace::new(&bad).is_err());
        let bad = SpaceConfig { legacy_base: Some(1 << 32), ..Default::default() };
        assert!(AddressSpace::new(&bad).is_err());
        let bad = SpaceConfig { region_size: 1000, ..Default::default() };
        assert!(AddressSpace::new(&bad).is_err());
    }

    #[test]
    fn bounds_ops() {
        let p = 0x1000;
        let b = AbsBounds::new(p, p + 24);
        assert_eq!(b.intersect(AbsBounds::new(p + 4, p + 16)), AbsBounds::new(p + 4, p + 16));
        assert_eq!(AbsBounds::WIDE.intersect(b), b);
        assert_eq!(AbsBounds::new(p, p + 8).intersect(AbsBounds::new(p + 4, p + 16)), AbsBounds::new(p + 4, p + 8));
        assert_eq!(AbsBounds::new(p, p + 4).intersect(AbsBounds::new(p + 8, p + 16)), AbsBounds::empty_at(p + 8));
        assert!(b.contains_range(p + 20, 4));
        assert!(!b.contains_range(p + 21, 4));
        assert!(b.contains(p + 24));
        assert!(!b.contains_range(u64::MAX, 1));
    }

    proptest! {
        #[test]
        fn interior_stability(sizes in prop::collection::vec(1u64..5000, 1..40), pick in any::<prop::sample::Index>(), off in any::<u64>()) {
            let mut s = space();
            let allocs: Vec<(u64, u64)> = sizes.iter().map(|&n| (s.lf_alloc(n).unwrap(), n)).collect();
            let (p, n) = allocs[pick.index(allocs.len())];
            let class = n.next_power_of_two().max(16);
            let k = off % class;
            prop_assert_eq!(s.lf_base(p + k), Some(p));
            prop_assert_eq!(s.lf_size(p + k), class);
            let mut sorted = allocs.clone();
            sorted.sort();
            for w in sorted.windows(2) {
                prop_assert!(w[0].0 + s.lf_size(w[0].0) <= w[1].0);
            }
        }
    }
}
