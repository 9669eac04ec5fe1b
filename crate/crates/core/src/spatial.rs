//! Static 3-d tree for nearest-neighbour queries over a fixed point set.

use nalgebra::Vector3;

#[derive(Debug, Clone)]
struct Node {
    index: usize,
    axis: usize,
    left: Option<Box<Node>>,
    right: Option<Box<Node>>,
}

/// Nearest-neighbour index over `(key, point)` pairs. Among equidistant
/// points the smallest key wins.
#[derive(Debug, Clone)]
pub struct KdTree<K> {
    keys: Vec<K>,
    points: Vec<Vector3<f64>>,
    root: Option<Box<Node>>,
}

impl<K: Ord + Copy> KdTree<K> {
    pub fn new(items: impl IntoIterator<Item = (K, Vector3<f64>)>) -> Self {
        let (keys, points): (Vec<K>, Vec<Vector3<f64>>) = items.into_iter().unzip();
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let root = Self::build(&points, &mut idx, 0);
        Self { keys, points, root }
    }

    fn build(points: &[Vector3<f64>], idx: &mut [usize], depth: usize) -> Option<Box<Node>> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % 3;
        idx.sort_by(|&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let mid = idx.len() / 2;
        let (lo, rest) = idx.split_at_mut(mid);
        let (m, hi) = rest.split_first_mut().expect("non-empty");
        Some(Box::new(Node {
            index: *m,
            axis,
            left: Self::build(points, lo, depth + 1),
            right: Self::build(points, hi, depth + 1),
        }))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &Vector3<f64> {
        &self.points[i]
    }

    pub fn key(&self, i: usize) -> K {
        self.keys[i]
    }

    /// Returns `(item index, distance)` of the nearest item.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        self.search(self.root.as_deref(), q, &mut best);
        best.map(|(i, d2)| (i, d2.sqrt()))
    }

    fn better(&self, cand: usize, d2: f64, best: &Option<(usize, f64)>) -> bool {
        match best {
            None => true,
            Some((b, bd2)) => d2 < *bd2 || (d2 == *bd2 && self.keys[cand] < self.keys[*b]),
        }
    }

    fn search(&self, node: Option<&Node>, q: &Vector3<f64>, best: &mut Option<(usize, f64)>) {
        let Some(node) = node else { return };
        let p = &self.points[node.index];
        let d2 = (p - q).norm_squared();
        if self.better(node.index, d2, best) {
            *best = Some((node.index, d2));
        }
        let diff = q[node.axis] - p[node.axis];
        let (near, far) = if diff < 0.0 {
            (node.left.as_deref(), node.right.as_deref())
        } else {
            (node.right.as_deref(), node.left.as_deref())
        };
        self.search(near, q, best);
        // `<=` so equidistant points across the plane are still visited
        if best.is_none_or(|(_, bd2)| diff * diff <= bd2) {
            self.search(far, q, best);
        }
    }
}
