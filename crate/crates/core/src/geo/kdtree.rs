use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 8;

/// Static 2-d tree over a point set.
///
/// Points are addressed by their position in the slice handed to
/// [`KdTree::new`]; that position doubles as the tie-break key, so equal
/// distances resolve to the lower position.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 2]>,
    order: Vec<usize>,
    axes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        let n = points.len();
        let mut tree = Self {
            points,
            order: (0..n).collect(),
            axes: vec![0; n],
        };
        tree.build(0, n);
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> [f64; 2] {
        self.points[index]
    }

    fn build(&mut self, lo: usize, hi: usize) {
        if hi - lo <= LEAF_SIZE {
            return;
        }
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for &i in &self.order[lo..hi] {
            for a in 0..2 {
                min[a] = min[a].min(self.points[i][a]);
                max[a] = max[a].max(self.points[i][a]);
            }
        }
        let axis = usize::from(max[1] - min[1] > max[0] - min[0]);
        let mid = lo + (hi - lo) / 2;
        let points = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            points[a][axis]
                .total_cmp(&points[b][axis])
                .then(a.cmp(&b))
        });
        self.axes[mid] = axis as u8;
        self.build(lo, mid);
        self.build(mid + 1, hi);
    }

    /// Up to `k` nearest points with distance `<= radius`, ascending by
    /// `(distance, index)`. `exclude` drops one index (the query itself).
    pub fn knn(&self, q: [f64; 2], k: usize, radius: f64, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 || self.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        let r2 = radius * radius;
        self.knn_rec(0, self.len(), q, k, r2, exclude, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.d2.sqrt())).collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn knn_rec(
        &self,
        lo: usize,
        hi: usize,
        q: [f64; 2],
        k: usize,
        r2: f64,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        if hi - lo <= LEAF_SIZE {
            for &i in &self.order[lo..hi] {
                self.offer(i, q, k, r2, exclude, heap);
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let i = self.order[mid];
        let axis = self.axes[mid] as usize;
        self.offer(i, q, k, r2, exclude, heap);
        let diff = q[axis] - self.points[i][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_rec(near.0, near.1, q, k, r2, exclude, heap);
        let bound = if heap.len() < k {
            r2
        } else {
            r2.min(heap.peek().map_or(r2, |c| c.d2))
        };
        // `<=` keeps equal-distance candidates reachable for the id tie-break.
        if diff * diff <= bound {
            self.knn_rec(far.0, far.1, q, k, r2, exclude, heap);
        }
    }

    #[inline]
    fn offer(
        &self,
        i: usize,
        q: [f64; 2],
        k: usize,
        r2: f64,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        if Some(i) == exclude {
            return;
        }
        let p = self.points[i];
        let dx = q[0] - p[0];
        let dy = q[1] - p[1];
        let d2 = dx * dx + dy * dy;
        if d2 > r2 {
            return;
        }
        let c = Candidate { d2, index: i };
        if heap.len() < k {
            heap.push(c);
        } else if heap.peek().is_some_and(|top| c < *top) {
            heap.pop();
            heap.push(c);
        }
    }

    /// Every point with distance `<= radius` from `q`, in no particular order.
    pub fn within(&self, q: [f64; 2], radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.is_empty() {
            self.within_rec(0, self.len(), q, radius * radius, &mut out);
        }
        out
    }

    fn within_rec(&self, lo: usize, hi: usize, q: [f64; 2], r2: f64, out: &mut Vec<usize>) {
        if hi - lo <= LEAF_SIZE {
            for &i in &self.order[lo..hi] {
                let p = self.points[i];
                let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
                if dx * dx + dy * dy <= r2 {
                    out.push(i);
                }
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let i = self.order[mid];
        let axis = self.axes[mid] as usize;
        let p = self.points[i];
        let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
        if dx * dx + dy * dy <= r2 {
            out.push(i);
        }
        let diff = q[axis] - p[axis];
        if diff <= 0.0 || diff * diff <= r2 {
            self.within_rec(lo, mid, q, r2, out);
        }
        if diff >= 0.0 || diff * diff <= r2 {
            self.within_rec(mid + 1, hi, q, r2, out);
        }
    }
}
