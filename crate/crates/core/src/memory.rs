// SPDX-License-Identifier: Apache-2.0

//! Sparse, taint-labelled byte memory.
//!
//! Memory is stored in 4096-byte pages, each carrying the set of jobs whose
//! data has been written into it. Unwritten memory reads as zero. A page that
//! becomes entirely zero is dropped together with its labels.

use std::collections::{BTreeMap, BTreeSet};

use crate::ids::JobId;

pub const PAGE_SIZE: u64 = 4096;

pub type Labels = BTreeSet<JobId>;

/// Bytes together with the jobs they were derived from.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TaintedBytes {
    pub bytes: Vec<u8>,
    pub labels: Labels,
}

impl TaintedBytes {
    pub fn clean(bytes: Vec<u8>) -> Self {
        Self { bytes, labels: Labels::new() }
    }

    pub fn labelled(bytes: Vec<u8>, job: JobId) -> Self {
        Self { bytes, labels: Labels::from([job]) }
    }

    pub fn is_tainted(&self) -> bool {
        !self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("access [{addr:#x}, +{len:#x}) outside memory of {size:#x} bytes")]
pub struct OutOfBounds {
    pub addr: u64,
    pub len: u64,
    pub size: u64,
}

#[derive(Clone)]
struct Page {
    data: Box<[u8; PAGE_SIZE as usize]>,
    labels: Labels,
}

#[derive(Clone, Default)]
pub struct SparseMemory {
    size: u64,
    pages: BTreeMap<u64, Page>,
}

impl std::fmt::Debug for SparseMemory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SparseMemory({} bytes, {} resident pages)", self.size, self.pages.len())
    }
}

impl SparseMemory {
    pub fn new(size: u64) -> Self {
        Self { size, pages: BTreeMap::new() }
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    fn check(&self, addr: u64, len: u64) -> Result<(), OutOfBounds> {
        match addr.checked_add(len) {
            Some(end) if end <= self.size => Ok(()),
            _ => Err(OutOfBounds { addr, len, size: self.size }),
        }
    }

    /// Writes `data`. Pages fully covered take the new labels; partially
    /// covered pages accumulate them.
    pub fn write(&mut self, addr: u64, data: &TaintedBytes) -> Result<(), OutOfBounds> {
        let len = data.bytes.len() as u64;
        self.check(addr, len)?;
        let mut off = 0u64;
        while off < len {
            let a = addr + off;
            let page_no = a / PAGE_SIZE;
            let in_page = a % PAGE_SIZE;
            let n = (PAGE_SIZE - in_page).min(len - off);
            let chunk = &data.bytes[off as usize..(off + n) as usize];
            let full = n == PAGE_SIZE;
            match self.pages.get_mut(&page_no) {
                Some(page) => {
                    page.data[in_page as usize..(in_page + n) as usize].copy_from_slice(chunk);
                    if full {
                        page.labels = data.labels.clone();
                    } else {
                        page.labels.extend(data.labels.iter().copied());
                    }
                    if page.data.iter().all(|&b| b == 0) {
                        self.pages.remove(&page_no);
                    }
                }
                None if chunk.iter().all(|&b| b == 0) => {}
                None => {
                    let mut page = Page { data: Box::new([0; PAGE_SIZE as usize]), labels: data.labels.clone() };
                    page.data[in_page as usize..(in_page + n) as usize].copy_from_slice(chunk);
                    self.pages.insert(page_no, page);
                }
            }
            off += n;
        }
        Ok(())
    }

    pub fn read(&self, addr: u64, len: u64) -> Result<TaintedBytes, OutOfBounds> {
        self.check(addr, len)?;
        let mut out = TaintedBytes { bytes: vec![0; len as usize], labels: Labels::new() };
        let mut off = 0u64;
        while off < len {
            let a = addr + off;
            let page_no = a / PAGE_SIZE;
            let in_page = a % PAGE_SIZE;
            let n = (PAGE_SIZE - in_page).min(len - off);
            if let Some(page) = self.pages.get(&page_no) {
                out.bytes[off as usize..(off + n) as usize]
                    .copy_from_slice(&page.data[in_page as usize..(in_page + n) as usize]);
                out.labels.extend(page.labels.iter().copied());
            }
            off += n;
        }
        Ok(out)
    }

    pub fn zero(&mut self, addr: u64, len: u64) -> Result<(), OutOfBounds> {
        self.check(addr, len)?;
        if len == 0 {
            return Ok(());
        }
        let first = addr / PAGE_SIZE;
        let last = (addr + len - 1) / PAGE_SIZE;
        let resident: Vec<u64> = self.pages.range(first..=last).map(|(&p, _)| p).collect();
        for page_no in resident {
            let start = (page_no * PAGE_SIZE).max(addr);
            let end = ((page_no + 1) * PAGE_SIZE).min(addr + len);
            let page = self.pages.get_mut(&page_no).expect("resident");
            page.data[(start - page_no * PAGE_SIZE) as usize..(end - page_no * PAGE_SIZE) as usize].fill(0);
            if page.data.iter().all(|&b| b == 0) {
                self.pages.remove(&page_no);
            }
        }
        Ok(())
    }

    pub fn zero_all(&mut self) {
        self.pages.clear();
    }

    /// True iff every byte in the range is zero.
    pub fn is_zero(&self, addr: u64, len: u64) -> bool {
        if len == 0 {
            return true;
        }
        let first = addr / PAGE_SIZE;
        let last = (addr + len - 1) / PAGE_SIZE;
        self.pages.range(first..=last).all(|(&page_no, page)| {
            let start = (page_no * PAGE_SIZE).max(addr) - page_no * PAGE_SIZE;
            let end = ((page_no + 1) * PAGE_SIZE).min(addr + len) - page_no * PAGE_SIZE;
            page.data[start as usize..end as usize].iter().all(|&b| b == 0)
        })
    }

    /// Union of labels on resident pages overlapping the range.
    pub fn labels_in(&self, addr: u64, len: u64) -> Labels {
        if len == 0 {
            return Labels::new();
        }
        let first = addr / PAGE_SIZE;
        let last = (addr + len - 1) / PAGE_SIZE;
        self.pages.range(first..=last).flat_map(|(_, p)| p.labels.iter().copied()).collect()
    }

    pub fn all_labels(&self) -> Labels {
        self.pages.values().flat_map(|p| p.labels.iter().copied()).collect()
    }

    /// Resident (nonzero) pages as `(base address, labels)`.
    pub fn resident(&self) -> impl Iterator<Item = (u64, &Labels)> {
        self.pages.iter().map(|(&p, page)| (p * PAGE_SIZE, &page.labels))
    }

    pub fn resident_pages(&self) -> usize {
        self.pages.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unwritten_memory_is_zero_and_clean() {
        let m = SparseMemory::new(1 << 30);
        let r = m.read(12345, 100).unwrap();
        assert!(r.bytes.iter().all(|&b| b == 0));
        assert!(!r.is_tainted());
    }

    #[test]
    fn labels_follow_data_across_page_boundaries() {
        let mut m = SparseMemory::new(4 * PAGE_SIZE);
        m.write(PAGE_SIZE - 2, &TaintedBytes::labelled(vec![9; 4], JobId(1))).unwrap();
        assert_eq!(m.labels_in(0, PAGE_SIZE), Labels::from([JobId(1)]));
        assert_eq!(m.labels_in(PAGE_SIZE, 1), Labels::from([JobId(1)]));
        assert!(m.labels_in(2 * PAGE_SIZE, PAGE_SIZE).is_empty());
        m.zero(PAGE_SIZE - 2, 4).unwrap();
        assert_eq!(m.resident_pages(), 0);
    }

    #[test]
    fn full_page_overwrite_replaces_labels() {
        let mut m = SparseMemory::new(PAGE_SIZE);
        m.write(0, &TaintedBytes::labelled(vec![1; 10], JobId(1))).unwrap();
        m.write(0, &TaintedBytes::clean(vec![7; PAGE_SIZE as usize])).unwrap();
        assert!(m.all_labels().is_empty());
    }

    #[test]
    fn bounds_are_enforced() {
        let mut m = SparseMemory::new(100);
        assert!(m.write(99, &TaintedBytes::clean(vec![1, 2])).is_err());
        assert!(m.read(u64::MAX, 2).is_err());
    }

    proptest! {
        #[test]
        fn matches_flat_array(ops in prop::collection::vec((0u64..3 * PAGE_SIZE, prop::collection::vec(any::<u8>(), 0..600), any::<bool>()), 1..40)) {
            let size = 4 * PAGE_SIZE;
            let mut m = SparseMemory::new(size);
            let mut flat = vec![0u8; size as usize];
            for (addr, data, zero) in ops {
                let len = data.len() as u64;
                if zero {
                    m.zero(addr, len).unwrap();
                    flat[addr as usize..(addr + len) as usize].fill(0);
                } else {
                    m.write(addr, &TaintedBytes::labelled(data.clone(), JobId(3))).unwrap();
                    flat[addr as usize..(addr + len) as usize].copy_from_slice(&data);
                }
            }
            prop_assert_eq!(m.read(0, size).unwrap().bytes, flat.clone());
            for p in 0..4 {
                let page = &flat[(p * PAGE_SIZE) as usize..((p + 1) * PAGE_SIZE) as usize];
                prop_assert_eq!(m.is_zero(p * PAGE_SIZE, PAGE_SIZE), page.iter().all(|&b| b == 0));
            }
        }

        /// Labels survive arbitrary copies: reading any nonzero byte yields
        /// at least the labels of the data it came from.
        #[test]
        fn labels_follow_bytes_through_copies(ops in prop::collection::vec(
            (0u8..3, 0u64..3 * PAGE_SIZE, 0u64..3 * PAGE_SIZE, prop::collection::vec(any::<u8>(), 1..700), 0u32..4), 1..40)) {
            let size = 4 * PAGE_SIZE;
            let mut m = SparseMemory::new(size);
            let mut shadow: Vec<Labels> = vec![Labels::new(); size as usize];
            for (kind, a, b, data, job) in ops {
                let len = data.len() as u64;
                match kind {
                    0 => {
                        let labels: Labels = (job > 0).then_some(JobId(job)).into_iter().collect();
                        m.write(a, &TaintedBytes { bytes: data, labels: labels.clone() }).unwrap();
                        shadow[a as usize..(a + len) as usize].fill(labels);
                    }
                    1 => {
                        let copied = m.read(a, len).unwrap();
                        let src: Labels = shadow[a as usize..(a + len) as usize].iter().flatten().copied().collect();
                        m.write(b, &copied).unwrap();
                        shadow[b as usize..(b + len) as usize].fill(src);
                    }
                    _ => {
                        m.zero(a, len).unwrap();
                        shadow[a as usize..(a + len) as usize].fill(Labels::new());
                    }
                }
            }
            let all = m.read(0, size).unwrap();
            for (i, byte) in all.bytes.iter().enumerate() {
                if *byte != 0 {
                    let got = m.read(i as u64, 1).unwrap().labels;
                    prop_assert!(shadow[i].is_subset(&got), "byte {}: {:?} lost from {:?}", i, shadow[i], got);
                }
            }
        }
    }
}
