//! Two-pass, union-find connected-component labelling with 8-connectivity.

use super::{BBox, BinaryMask};

/// Label grid (0 = background, components numbered `1..=C` in raster order
/// of their first pixel) and per-component pixel counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    /// `sizes[l - 1]` is the pixel count of label `l`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn label_at(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Tight bounding box of component `label`, if it exists.
    pub fn bbox(&self, label: u32) -> Option<BBox> {
        if label == 0 || label as usize > self.sizes.len() {
            return None;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for (i, &l) in self.labels.iter().enumerate() {
            if l == label {
                let (x, y) = (i % self.width, i / self.width);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
        BBox::new(x0, y0, x1, y1).ok()
    }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the older (smaller) provisional label as root
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

pub fn connected_components(mask: &BinaryMask) -> Components {
    let (w, h) = (mask.width, mask.height);
    let mut provisional = vec![0u32; w * h];
    // provisional label 0 is reserved for background
    let mut sets = DisjointSet { parent: vec![0] };

    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let mut current = 0u32;
            // already-visited 8-neighbours: W, NW, N, NE
            let neighbours = [
                (x > 0).then(|| (x - 1, y)),
                (x > 0 && y > 0).then(|| (x - 1, y - 1)),
                (y > 0).then(|| (x, y - 1)),
                (x + 1 < w && y > 0).then(|| (x + 1, y - 1)),
            ];
            for (nx, ny) in neighbours.into_iter().flatten() {
                let l = provisional[ny * w + nx];
                if l == 0 {
                    continue;
                }
                if current == 0 {
                    current = l;
                } else if l != current {
                    sets.union(current, l);
                }
            }
            if current == 0 {
                current = sets.make();
            }
            provisional[y * w + x] = current;
        }
    }

    let mut final_of_root = vec![0u32; sets.parent.len()];
    let mut sizes = Vec::new();
    let mut labels = vec![0u32; w * h];
    for (i, &p) in provisional.iter().enumerate() {
        if p == 0 {
            continue;
        }
        let root = sets.find(p) as usize;
        if final_of_root[root] == 0 {
            sizes.push(0);
            final_of_root[root] = sizes.len() as u32;
        }
        let l = final_of_root[root];
        labels[i] = l;
        sizes[l as usize - 1] += 1;
    }
    Components {
        width: w,
        height: h,
        labels,
        sizes,
    }
}
