//! Patch-shuffle augmentation: an `n x n` grid permutation of image blocks.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, LabRng};
use crate::tensor::Tensor;

/// Permutation of the `n^2` grid blocks, 1-based and row-major. Output slot
/// `k` receives input block `order[k]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Permutation {
    n: usize,
    order: Vec<u32>,
}

impl Permutation {
    pub fn new(n: usize, order: Vec<u32>) -> Result<Self> {
        let len = n * n;
        if n == 0 || order.len() != len {
            return Err(Error::Config(alloc::format!("need {} entries for a {}x{} grid", len, n, n)));
        }
        let mut seen = alloc::vec![false; len];
        for &o in &order {
            let i = o as usize;
            if i == 0 || i > len || seen[i - 1] {
                return Err(Error::Config(alloc::format!("{:?} is not a permutation of 1..={}", order, len)));
            }
            seen[i - 1] = true;
        }
        Ok(Permutation { n, order })
    }

    pub fn identity(n: usize) -> Self {
        Permutation { n, order: (1..=(n * n) as u32).collect() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn order(&self) -> &[u32] {
        &self.order
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &o)| o as usize == i + 1)
    }

    pub fn invert(&self) -> Permutation {
        Permutation { n: self.n, order: invert_order(&self.order) }
    }

    /// The single permutation equivalent to shuffling by `self` and then by
    /// `next`: `shuffle(shuffle(x, self), next) == shuffle(x, self.then(next))`.
    pub fn then(&self, next: &Permutation) -> Result<Permutation> {
        if self.n != next.n {
            return Err(Error::Config("composing permutations of different grids".into()));
        }
        let order = next.order.iter().map(|&k| self.order[k as usize - 1]).collect();
        Ok(Permutation { n: self.n, order })
    }
}

/// Inverse of a 1-based permutation array: `inv[order[k]] = k`.
pub fn invert_order(order: &[u32]) -> Vec<u32> {
    let mut inv = alloc::vec![0u32; order.len()];
    for (k, &o) in order.iter().enumerate() {
        inv[o as usize - 1] = k as u32 + 1;
    }
    inv
}

/// Uniform permutation by Fisher-Yates from the given stream.
pub fn make_permutation_with(n: usize, rng: &mut LabRng) -> Permutation {
    let mut order: Vec<u32> = (1..=(n * n) as u32).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    Permutation { n, order }
}

pub fn make_permutation(n: usize, rng_seed: u64) -> Result<Permutation> {
    if n == 0 {
        return Err(Error::Config("grid side must be at least 1".into()));
    }
    Ok(make_permutation_with(n, &mut seed::rng(rng_seed, &[0x5045_524d])))
}

/// Rearrange the image blocks according to `perm`.
pub fn shuffle_patches(image: &Tensor, perm: &Permutation) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Shape(alloc::format!("expected a square image, got {:?}", s)));
    }
    let size = s[0];
    let n = perm.n;
    if size % n != 0 {
        return Err(Error::Config(alloc::format!("grid {} does not divide image size {}", n, size)));
    }
    let b = size / n;
    let src = image.data();
    let mut out = alloc::vec![0.0; src.len()];
    for (k, &o) in perm.order.iter().enumerate() {
        let (dy, dx) = (k / n, k % n);
        let from = o as usize - 1;
        let (sy, sx) = (from / n, from % n);
        for y in 0..b {
            let d = (dy * b + y) * size + dx * b;
            let s = (sy * b + y) * size + sx * b;
            out[d..d + b].copy_from_slice(&src[s..s + b]);
        }
    }
    Tensor::new(s.to_vec(), out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShuffledTriplet {
    pub sketch_g1: Tensor,
    pub photo_g1: Tensor,
    pub photo_g2: Tensor,
    pub gamma1: Permutation,
    pub gamma2: Permutation,
    /// Number of times `gamma2` had to be redrawn to differ from `gamma1`.
    pub redraws: u32,
}

/// Shuffle a sketch and its photo with one permutation and the photo again
/// with a different one.
pub fn make_shuffled_triplet(sketch: &Tensor, photo: &Tensor, n: usize, rng: &mut LabRng) -> Result<ShuffledTriplet> {
    if n < 2 {
        return Err(Error::Config(
            "patch shuffling needs a grid of at least 2x2 to draw distinct permutations; disable the patch-shuffle term".into(),
        ));
    }
    if sketch.shape() != photo.shape() {
        return Err(Error::shape(photo.shape(), sketch.shape()));
    }
    let gamma1 = make_permutation_with(n, rng);
    let mut gamma2 = make_permutation_with(n, rng);
    let mut redraws = 0;
    while gamma2 == gamma1 {
        gamma2 = make_permutation_with(n, rng);
        redraws += 1;
    }
    Ok(ShuffledTriplet {
        sketch_g1: shuffle_patches(sketch, &gamma1)?,
        photo_g1: shuffle_patches(photo, &gamma1)?,
        photo_g2: shuffle_patches(photo, &gamma2)?,
        gamma1,
        gamma2,
        redraws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn grid4() -> Tensor {
        Tensor::new(vec![4, 4], (0..16).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn permutation_examples() {
        assert_eq!(make_permutation(1, 9).unwrap().order(), &[1]);
        assert_eq!(make_permutation(3, 5).unwrap(), make_permutation(3, 5).unwrap());
        assert!(Permutation::identity(3).invert().is_identity());
        let p = Permutation::new(1, vec![1]).unwrap();
        assert!(p.is_identity());
        assert!(Permutation::new(2, vec![1, 1, 2, 3]).is_err());
        assert!(Permutation::new(2, vec![1, 2, 3]).is_err());
    }

    #[test]
    fn inversion_examples() {
        assert_eq!(invert_order(&[2, 1]), vec![2, 1]);
        assert_eq!(invert_order(&[3, 1, 2]), vec![2, 3, 1]);
        assert_eq!(invert_order(&[1, 2, 3, 4]), vec![1, 2, 3, 4]);
    }

    #[test]
    fn shuffle_examples() {
        let x = grid4();
        assert_eq!(shuffle_patches(&x, &Permutation::identity(2)).unwrap(), x);
        let g = Permutation::new(2, vec![2, 1, 3, 4]).unwrap();
        let y = shuffle_patches(&x, &g).unwrap();
        #[rustfmt::skip]
        let expected = [
            2.0, 3.0, 0.0, 1.0,
            6.0, 7.0, 4.0, 5.0,
            8.0, 9.0, 10.0, 11.0,
            12.0, 13.0, 14.0, 15.0,
        ];
        assert_eq!(y.data(), &expected);
        assert_eq!(shuffle_patches(&y, &g.invert()).unwrap(), x);
        let bad = Tensor::zeros(&[5, 5]);
        assert!(shuffle_patches(&bad, &g).is_err());
    }

    #[test]
    fn shuffled_triplet_contract() {
        let mut rng = seed::rng(4, &[]);
        let s = grid4();
        let p = Tensor::new(vec![4, 4], (0..16).map(|v| (v * v) as f64).collect()).unwrap();
        for _ in 0..200 {
            let t = make_shuffled_triplet(&s, &p, 2, &mut rng).unwrap();
            assert_ne!(t.gamma1, t.gamma2);
            let mut a = t.sketch_g1.data().to_vec();
            let mut b = s.data().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert_eq!(a, b);
        }
        assert!(matches!(make_shuffled_triplet(&s, &p, 1, &mut rng), Err(Error::Config(_))));
    }
}
