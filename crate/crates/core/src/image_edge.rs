//! Canny edge detection and a 2-D k-d tree over edge pixels.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    /// Row-major intensities.
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width as usize * height as usize {
            return Err(Error::InvalidParameter(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// ITU-R BT.601 luma.
pub fn rgb_to_gray(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
        .round()
        .clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CannyParams {
    pub low_threshold: f64,
    pub high_threshold: f64,
    pub gaussian_sigma: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            low_threshold: 40.0,
            high_threshold: 110.0,
            gaussian_sigma: 1.4,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * src[y * w + clamp(x as i64 + i as i64 - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[clamp(y as i64 + i as i64 - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Standard Canny: Gaussian smoothing, Sobel gradients, non-maximum suppression and
/// hysteresis with 8-connectivity. Edge pixels are returned in row-major order.
pub fn canny_edges(img: &GrayImage, params: &CannyParams) -> Result<EdgePixelSet> {
    if img.is_empty() {
        return Err(Error::EmptyImage);
    }
    if !(params.high_threshold >= params.low_threshold && params.low_threshold > 0.0) {
        return Err(Error::InvalidParameter(
            "canny thresholds need high >= low > 0".into(),
        ));
    }
    let (w, h) = (img.width as usize, img.height as usize);
    let src: Vec<f64> = img.pixels.iter().map(|&v| v as f64).collect();
    let s = blur(&src, w, h, params.gaussian_sigma);
    let at = |x: i64, y: i64| s[y.clamp(0, h as i64 - 1) as usize * w + x.clamp(0, w as i64 - 1) as usize];

    let mut mag = vec![0.0; w * h];
    let mut dir = vec![0u8; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            let i = y as usize * w + x as usize;
            mag[i] = gx.hypot(gy);
            // Quantize gradient direction into 0°, 45°, 90°, 135°.
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            dir[i] = if !(22.5..157.5).contains(&angle) {
                0
            } else if angle < 67.5 {
                1
            } else if angle < 112.5 {
                2
            } else {
                3
            };
        }
    }

    let m = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            let v = mag[i];
            if v < params.low_threshold {
                continue;
            }
            let (a, b) = match dir[i] {
                0 => (m(x - 1, y), m(x + 1, y)),
                1 => (m(x - 1, y - 1), m(x + 1, y + 1)),
                2 => (m(x, y - 1), m(x, y + 1)),
                _ => (m(x + 1, y - 1), m(x - 1, y + 1)),
            };
            // Ties resolved toward the lower-index neighbor side to keep lines one pixel thick.
            if v > a && v >= b {
                thin[i] = v;
            }
        }
    }

    let mut state = vec![0u8; w * h]; // 0 none, 1 weak, 2 strong
    let mut stack = Vec::new();
    for i in 0..w * h {
        if thin[i] >= params.high_threshold {
            state[i] = 2;
            stack.push(i);
        } else if thin[i] >= params.low_threshold {
            state[i] = 1;
        }
    }
    while let Some(i) = stack.pop() {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if state[j] == 1 {
                    state[j] = 2;
                    stack.push(j);
                }
            }
        }
    }
    let pixels = (0..w * h)
        .filter(|&i| state[i] == 2)
        .map(|i| Vector2::new((i % w) as f64, (i / w) as f64))
        .collect();
    EdgePixelSet::new(pixels, img.width, img.height)
}

#[derive(Debug, Clone)]
struct KdNode {
    point: usize,
    axis: u8,
    left: Option<usize>,
    right: Option<usize>,
}

/// Static 2-D k-d tree; point indices are insertion order.
#[derive(Debug, Clone, Default)]
pub struct KdTree2 {
    points: Vec<[f64; 2]>,
    nodes: Vec<KdNode>,
    root: Option<usize>,
}

#[derive(PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree2 {
    pub fn build(points: &[Vector2<f64>]) -> Self {
        let mut tree = KdTree2 {
            points: points.iter().map(|p| [p.x, p.y]).collect(),
            nodes: Vec::with_capacity(points.len()),
            root: None,
        };
        let mut idx: Vec<usize> = (0..points.len()).collect();
        tree.root = tree.build_rec(&mut idx, 0);
        tree
    }

    fn build_rec(&mut self, idx: &mut [usize], depth: usize) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % 2;
        let pts = &self.points;
        idx.sort_unstable_by(|&a, &b| pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b)));
        let mid = idx.len() / 2;
        let point = idx[mid];
        let node = self.nodes.len();
        self.nodes.push(KdNode {
            point,
            axis: axis as u8,
            left: None,
            right: None,
        });
        let (lo, hi) = idx.split_at_mut(mid);
        let left = self.build_rec(lo, depth + 1);
        let right = self.build_rec(&mut hi[1..], depth + 1);
        self.nodes[node].left = left;
        self.nodes[node].right = right;
        Some(node)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Exact k nearest neighbors as `(index, squared distance)` sorted by distance, ties by index.
    pub fn knn(&self, q: &Vector2<f64>, k: usize) -> Vec<(usize, f64)> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            if let Some(r) = self.root {
                self.knn_rec(r, [q.x, q.y], k, &mut heap);
            }
        }
        let mut out: Vec<(usize, f64)> = heap.into_iter().map(|c| (c.index, c.dist2)).collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    fn knn_rec(&self, node: usize, q: [f64; 2], k: usize, heap: &mut BinaryHeap<Candidate>) {
        let n = &self.nodes[node];
        let p = self.points[n.point];
        let dist2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
        let cand = Candidate {
            dist2,
            index: n.point,
        };
        if heap.len() < k {
            heap.push(cand);
        } else if heap.peek().is_some_and(|worst| cand < *worst) {
            heap.pop();
            heap.push(cand);
        }
        let axis = n.axis as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if let Some(c) = near {
            self.knn_rec(c, q, k, heap);
        }
        if let Some(c) = far {
            // `<=` keeps equal-distance points with smaller indices reachable.
            if heap.len() < k || heap.peek().is_some_and(|w| diff * diff <= w.dist2) {
                self.knn_rec(c, q, k, heap);
            }
        }
    }
}

/// Image edge pixels with a k-d tree index.
#[derive(Debug, Clone)]
pub struct EdgePixelSet {
    pub width: u32,
    pub height: u32,
    pixels: Vec<Vector2<f64>>,
    index: KdTree2,
}

impl EdgePixelSet {
    pub fn new(pixels: Vec<Vector2<f64>>, width: u32, height: u32) -> Result<Self> {
        let (w, h) = (width as f64, height as f64);
        if let Some(p) = pixels
            .iter()
            .find(|p| !(p.x >= 0.0 && p.y >= 0.0 && p.x < w && p.y < h))
        {
            return Err(Error::InvalidParameter(format!(
                "edge pixel ({}, {}) outside {width}x{height}",
                p.x, p.y
            )));
        }
        let index = KdTree2::build(&pixels);
        Ok(Self {
            width,
            height,
            pixels,
            index,
        })
    }

    pub fn pixels(&self) -> &[Vector2<f64>] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Exact Euclidean `kappa`-nearest edge pixels, nearest first.
    pub fn knn_query(&self, p: &Vector2<f64>, kappa: usize) -> Result<Vec<Vector2<f64>>> {
        if self.pixels.len() < kappa {
            return Err(Error::InsufficientPixels {
                available: self.pixels.len(),
                requested: kappa,
            });
        }
        Ok(self
            .index
            .knn(p, kappa)
            .into_iter()
            .map(|(i, _)| self.pixels[i])
            .collect())
    }
}
