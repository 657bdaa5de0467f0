//! Exact nearest-neighbor and radius queries over static 3D point sets.

use crate::linalg::Vec3;
use crate::scalar::Real;

const LEAF_SIZE: usize = 12;

#[derive(Clone, Debug)]
enum Node<T> {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: T, left: usize, right: usize },
}

/// Balanced k-d tree over a borrowed-then-owned copy of the points.
#[derive(Clone, Debug)]
pub struct KdTree<T> {
    points: Vec<Vec3<T>>,
    order: Vec<usize>,
    nodes: Vec<Node<T>>,
}

impl<T: Real> KdTree<T> {
    pub fn new(points: &[Vec3<T>]) -> Self {
        let mut tree = Self { points: points.to_vec(), order: (0..points.len()).collect(), nodes: Vec::new() };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3<T>] {
        &self.points
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = self.points[self.order[start]];
        let mut hi = lo;
        for &i in &self.order[start..end] {
            lo = lo.min(self.points[i]);
            hi = hi.max(self.points[i]);
        }
        let ext = hi - lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = (start + end) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].partial_cmp(&pts[b][axis]).unwrap_or(std::cmp::Ordering::Equal)
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Split { axis, value, left: 0, right: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// Index of the nearest point and its squared distance; ties resolve to the smaller index.
    pub fn nearest(&self, q: Vec3<T>) -> Option<(usize, T)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, T::infinity());
        self.nearest_rec(0, q, &mut best);
        Some(best)
    }

    fn nearest_rec(&self, node: usize, q: Vec3<T>, best: &mut (usize, T)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = (self.points[i] - q).norm_squared();
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < T::zero() { (left, right) } else { (right, left) };
                self.nearest_rec(near, q, best);
                if diff * diff <= best.1 {
                    self.nearest_rec(far, q, best);
                }
            }
        }
    }

    /// All indices with ‖p − q‖ ≤ radius, sorted ascending.
    pub fn within_radius(&self, q: Vec3<T>, radius: T) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.points.is_empty() {
            self.radius_rec(0, q, radius * radius, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn radius_rec(&self, node: usize, q: Vec3<T>, r2: T, out: &mut Vec<usize>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                out.extend(self.order[start..end].iter().copied().filter(|&i| (self.points[i] - q).norm_squared() <= r2));
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                if diff <= T::zero() || diff * diff <= r2 {
                    self.radius_rec(left, q, r2, out);
                }
                if diff >= T::zero() || diff * diff <= r2 {
                    self.radius_rec(right, q, r2, out);
                }
            }
        }
    }
}
