//! Fixed-length bit sets shared cheaply between micro-ops.

use std::fmt;
use std::sync::Arc;

pub(crate) fn words_for(len: usize) -> usize {
    len.div_ceil(64)
}

/// Immutable bit set over `0..len`, reference counted so programs can share
/// one mask across thousands of micro-ops.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    words: Arc<[u64]>,
    len: usize,
    ones: usize,
}

impl Mask {
    pub fn from_words(words: Vec<u64>, len: usize) -> Self {
        assert_eq!(words.len(), words_for(len), "word count does not match length");
        let mut words = words;
        if let Some(last) = words.last_mut() {
            let tail = len % 64;
            if tail != 0 {
                *last &= (1u64 << tail) - 1;
            }
        }
        let ones = words.iter().map(|w| w.count_ones() as usize).sum();
        Mask {
            words: words.into(),
            len,
            ones,
        }
    }

    pub fn empty(len: usize) -> Self {
        Self::from_words(vec![0; words_for(len)], len)
    }

    pub fn full(len: usize) -> Self {
        Self::from_words(vec![u64::MAX; words_for(len)], len)
    }

    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut words = vec![0u64; words_for(len)];
        for i in indices {
            assert!(i < len, "index {i} out of range {len}");
            words[i / 64] |= 1 << (i % 64);
        }
        Self::from_words(words, len)
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        Self::from_indices(bits.len(), bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i))
    }

    pub fn single(len: usize, index: usize) -> Self {
        Self::from_indices(len, [index])
    }

    pub fn range(len: usize, range: std::ops::Range<usize>) -> Self {
        Self::from_indices(len, range)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn count(&self) -> usize {
        self.ones
    }

    pub fn is_full(&self) -> bool {
        self.ones == self.len
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn get(&self, i: usize) -> bool {
        i < self.len && self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    None
                } else {
                    let b = w.trailing_zeros() as usize;
                    w &= w - 1;
                    Some(wi * 64 + b)
                }
            })
        })
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    /// Lower-case hex, least significant word first, words separated by `.`.
    pub fn to_hex(&self) -> String {
        let parts: Vec<String> = self.words.iter().map(|w| format!("{w:x}")).collect();
        format!("{}:{}", self.len, parts.join("."))
    }

    pub fn parse_hex(text: &str) -> Result<Self, String> {
        let (len, body) = text
            .split_once(':')
            .ok_or_else(|| format!("mask `{text}` lacks a length prefix"))?;
        let len: usize = len.parse().map_err(|e| format!("mask length: {e}"))?;
        let words = if body.is_empty() {
            Vec::new()
        } else {
            body.split('.')
                .map(|w| u64::from_str_radix(w, 16).map_err(|e| format!("mask word `{w}`: {e}")))
                .collect::<Result<Vec<_>, _>>()?
        };
        if words.len() != words_for(len) {
            return Err(format!("mask `{text}` has {} words, expected {}", words.len(), words_for(len)));
        }
        Ok(Self::from_words(words, len))
    }
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mask({} of {})", self.ones, self.len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tail_bits_are_cleared() {
        let m = Mask::full(70);
        assert_eq!(m.count(), 70);
        assert_eq!(m.words()[1], (1 << 6) - 1);
    }

    #[test]
    fn hex_round_trip() {
        let m = Mask::from_indices(130, [0, 5, 64, 129]);
        let back = Mask::parse_hex(&m.to_hex()).unwrap();
        assert_eq!(m, back);
        assert_eq!(back.iter_ones().collect::<Vec<_>>(), vec![0, 5, 64, 129]);
    }

    #[test]
    fn zero_length() {
        let m = Mask::empty(0);
        assert!(m.is_empty());
        assert_eq!(Mask::parse_hex(&m.to_hex()).unwrap(), m);
    }
}
