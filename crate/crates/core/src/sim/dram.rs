use std::collections::HashMap;

const CHUNK: u64 = 4096;

/// Sparse, virtually addressed functional memory image. Unwritten bytes read
/// as zero.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DramImage {
    chunks: HashMap<u64, Box<[u8]>>,
}

impl DramImage {
    pub fn new() -> DramImage {
        DramImage::default()
    }

    pub fn read_into(&self, vaddr: u64, out: &mut [u8]) {
        let mut at = vaddr;
        let mut done = 0;
        while done < out.len() {
            let off = (at % CHUNK) as usize;
            let n = (CHUNK as usize - off).min(out.len() - done);
            match self.chunks.get(&(at / CHUNK)) {
                Some(c) => out[done..done + n].copy_from_slice(&c[off..off + n]),
                None => out[done..done + n].fill(0),
            }
            done += n;
            at += n as u64;
        }
    }

    pub fn read(&self, vaddr: u64, len: usize) -> Vec<u8> {
        let mut v = vec![0; len];
        self.read_into(vaddr, &mut v);
        v
    }

    pub fn read_i8(&self, vaddr: u64, len: usize) -> Vec<i8> {
        self.read(vaddr, len).into_iter().map(|b| b as i8).collect()
    }

    pub fn write(&mut self, vaddr: u64, data: &[u8]) {
        let mut at = vaddr;
        let mut done = 0;
        while done < data.len() {
            let off = (at % CHUNK) as usize;
            let n = (CHUNK as usize - off).min(data.len() - done);
            let chunk = self.chunks.entry(at / CHUNK).or_insert_with(|| vec![0; CHUNK as usize].into_boxed_slice());
            chunk[off..off + n].copy_from_slice(&data[done..done + n]);
            done += n;
            at += n as u64;
        }
    }

    pub fn write_i8(&mut self, vaddr: u64, data: &[i8]) {
        let bytes: Vec<u8> = data.iter().map(|&v| v as u8).collect();
        self.write(vaddr, &bytes);
    }
}
