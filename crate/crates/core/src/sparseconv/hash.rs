/// Open-addressing map from Morton key to row index (linear probing,
/// power-of-two capacity, load factor ≤ 0.5).
#[derive(Clone, Debug)]
pub struct KeyIndex {
    slots: Vec<u64>,
    rows: Vec<u32>,
    mask: usize,
    len: usize,
}

const EMPTY: u64 = u64::MAX;

#[inline]
fn mix(key: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = key.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl KeyIndex {
    pub fn with_capacity(n: usize) -> Self {
        let cap = (n.max(1) * 2).next_power_of_two();
        KeyIndex {
            slots: vec![EMPTY; cap],
            rows: vec![0; cap],
            mask: cap - 1,
            len: 0,
        }
    }

    /// Builds the index for `keys[i] → i`. Keys are 63-bit, so `u64::MAX`
    /// never collides with a real key.
    pub fn from_keys(keys: &[u64]) -> Self {
        let mut idx = Self::with_capacity(keys.len());
        for (i, &k) in keys.iter().enumerate() {
            idx.insert(k, i);
        }
        idx
    }

    pub fn insert(&mut self, key: u64, row: usize) {
        debug_assert!(key != EMPTY);
        let mut s = mix(key) as usize & self.mask;
        loop {
            if self.slots[s] == EMPTY {
                self.slots[s] = key;
                self.rows[s] = row as u32;
                self.len += 1;
                return;
            }
            if self.slots[s] == key {
                self.rows[s] = row as u32;
                return;
            }
            s = (s + 1) & self.mask;
        }
    }

    #[inline]
    pub fn get(&self, key: u64) -> Option<usize> {
        let mut s = mix(key) as usize & self.mask;
        loop {
            let k = self.slots[s];
            if k == key {
                return Some(self.rows[s] as usize);
            }
            if k == EMPTY {
                return None;
            }
            s = (s + 1) & self.mask;
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}
