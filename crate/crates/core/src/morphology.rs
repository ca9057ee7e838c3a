//! Binary morphology on boolean grids and hole filling.
//!
//! Cells outside the grid count as background for every operator.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use ndarray::Array2;

/// Dilation by a `kernel x kernel` square (kernel odd).
pub fn dilate(grid: &Array2<bool>, kernel: usize) -> Array2<bool> {
    let r = (kernel / 2) as isize;
    let (h, w) = grid.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (i, j) = (i as isize, j as isize);
        (i - r..=i + r).any(|y| {
            (j - r..=j + r).any(|x| {
                y >= 0 && x >= 0 && y < h as isize && x < w as isize && grid[[y as usize, x as usize]]
            })
        })
    })
}

/// Erosion by a `kernel x kernel` square (kernel odd); windows reaching past
/// the border erode.
pub fn erode(grid: &Array2<bool>, kernel: usize) -> Array2<bool> {
    let r = (kernel / 2) as isize;
    let (h, w) = grid.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (i, j) = (i as isize, j as isize);
        (i - r..=i + r).all(|y| {
            (j - r..=j + r).all(|x| {
                y >= 0 && x >= 0 && y < h as isize && x < w as isize && grid[[y as usize, x as usize]]
            })
        })
    })
}

pub fn closing(grid: &Array2<bool>, kernel: usize) -> Array2<bool> {
    erode(&dilate(grid, kernel), kernel)
}

fn border_cells(h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..h).flat_map(move |i| {
        (0..w).filter_map(move |j| (i == 0 || j == 0 || i + 1 == h || j + 1 == w).then_some((i, j)))
    })
}

fn neighbors4(i: usize, j: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    [
        (i.wrapping_sub(1), j),
        (i + 1, j),
        (i, j.wrapping_sub(1)),
        (i, j + 1),
    ]
    .into_iter()
    .filter(move |&(y, x)| y < h && x < w)
}

/// Sets every background cell that is not 4-connected to the border through
/// background cells. Foreground cells are untouched.
pub fn fill_holes(binary: &Array2<bool>) -> Array2<bool> {
    let (h, w) = binary.dim();
    let mut outside = Array2::from_elem((h, w), false);
    let mut queue = VecDeque::new();
    for (i, j) in border_cells(h, w) {
        if !binary[[i, j]] {
            outside[[i, j]] = true;
            queue.push_back((i, j));
        }
    }
    while let Some((i, j)) = queue.pop_front() {
        for (y, x) in neighbors4(i, j, h, w) {
            if !binary[[y, x]] && !outside[[y, x]] {
                outside[[y, x]] = true;
                queue.push_back((y, x));
            }
        }
    }
    Array2::from_shape_fn((h, w), |(i, j)| binary[[i, j]] || !outside[[i, j]])
}

#[derive(PartialEq)]
struct Level(f32, usize, usize);

impl Eq for Level {}

impl PartialOrd for Level {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Level {
    // reversed: BinaryHeap pops the lowest level first
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| (other.1, other.2).cmp(&(self.1, self.2)))
    }
}

/// Grey-level hole filling: each cell receives the smallest possible maximum
/// score along a 4-connected path to the border.
///
/// For every threshold `t`, `fill_holes(map > t) == fill_holes_grey(map) > t`,
/// so one pass replaces a binary fill per threshold.
pub fn fill_holes_grey(map: &Array2<f32>) -> Array2<f32> {
    let (h, w) = map.dim();
    let mut level = Array2::from_elem((h, w), f32::INFINITY);
    let mut done = Array2::from_elem((h, w), false);
    let mut heap = BinaryHeap::new();
    for (i, j) in border_cells(h, w) {
        level[[i, j]] = map[[i, j]];
        heap.push(Level(map[[i, j]], i, j));
    }
    while let Some(Level(v, i, j)) = heap.pop() {
        if done[[i, j]] {
            continue;
        }
        done[[i, j]] = true;
        for (y, x) in neighbors4(i, j, h, w) {
            if done[[y, x]] {
                continue;
            }
            let cand = v.max(map[[y, x]]);
            if cand < level[[y, x]] {
                level[[y, x]] = cand;
                heap.push(Level(cand, y, x));
            }
        }
    }
    level
}
