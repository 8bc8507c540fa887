use std::collections::HashMap;

const PAGE_SIZE: u64 = 4096;

/// Lazily materialized, byte-addressable backing store. Bytes that were
/// never written read as 0.
#[derive(Clone, Debug, Default)]
pub(crate) struct Memory {
    pages: HashMap<u64, Box<[u8; PAGE_SIZE as usize]>>,
}

impl Memory {
    pub(crate) fn read(&self, addr: u64, len: u64) -> Vec<u8> {
        let mut out = Vec::with_capacity(len as usize);
        for (page, lo, hi) in spans(addr, len) {
            match self.pages.get(&page) {
                Some(bytes) => out.extend_from_slice(&bytes[lo..hi]),
                None => out.resize(out.len() + (hi - lo), 0),
            }
        }
        out
    }

    pub(crate) fn read_byte(&self, addr: u64) -> u8 {
        self.pages
            .get(&(addr / PAGE_SIZE))
            .map_or(0, |page| page[(addr % PAGE_SIZE) as usize])
    }

    fn page_mut(&mut self, page: u64) -> &mut [u8; PAGE_SIZE as usize] {
        self.pages
            .entry(page)
            .or_insert_with(|| Box::new([0; PAGE_SIZE as usize]))
    }

    pub(crate) fn write(&mut self, addr: u64, bytes: &[u8]) {
        let mut rest = bytes;
        for (page, lo, hi) in spans(addr, bytes.len() as u64) {
            let (head, tail) = rest.split_at(hi - lo);
            self.page_mut(page)[lo..hi].copy_from_slice(head);
            rest = tail;
        }
    }

    pub(crate) fn fill(&mut self, addr: u64, len: u64, value: u8) {
        for (page, lo, hi) in spans(addr, len) {
            self.page_mut(page)[lo..hi].fill(value);
        }
    }
}

/// Splits `[addr, addr + len)` into `(page, start, end)` pieces.
fn spans(addr: u64, len: u64) -> impl Iterator<Item = (u64, usize, usize)> {
    let end = addr + len;
    let mut cur = addr;
    std::iter::from_fn(move || {
        if cur >= end {
            return None;
        }
        let page = cur / PAGE_SIZE;
        let stop = end.min((page + 1) * PAGE_SIZE);
        let piece = (page, (cur % PAGE_SIZE) as usize, (stop - page * PAGE_SIZE) as usize);
        cur = stop;
        Some(piece)
    })
}
