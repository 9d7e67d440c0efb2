/// Row-major 2-D grid of labels or scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), height * width, "grid size");
        Self { height, width, data }
    }

    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_extent<U>(&self, other: &Grid<U>) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Samples the pixel nearest each cell center of a grid `factor` times
    /// coarser.
    pub fn downsample_nearest(&self, factor: usize) -> Self {
        assert!(factor >= 1);
        if factor == 1 {
            return self.clone();
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(self.get(r * factor + factor / 2, c * factor + factor / 2).clone());
            }
        }
        Self {
            height: h,
            width: w,
            data,
        }
    }
}
