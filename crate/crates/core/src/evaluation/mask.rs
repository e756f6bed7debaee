use serde::{Deserialize, Serialize};

/// Binary pixel mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, fill: bool) -> Self {
        Mask {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Mask::new(width, height, false);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(x, y);
            }
        }
        m
    }

    /// Half-open box `[x0, x1) x [y0, y1)`, clipped to the image.
    pub fn from_box(
        width: usize,
        height: usize,
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
    ) -> Self {
        Mask::from_fn(width, height, |x, y| {
            (x0..x1).contains(&x) && (y0..y1).contains(&y)
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Out-of-bounds reads as `false`.
    fn get_signed(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.data[y as usize * self.width + x as usize]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn complement(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| !v).collect(),
        }
    }

    /// Square-neighbourhood dilation by `r` pixels.
    pub fn dilate(&self, r: usize) -> Mask {
        let r = r as isize;
        Mask::from_fn(self.width, self.height, |x, y| {
            (-r..=r).any(|dy| (-r..=r).any(|dx| self.get_signed(x as isize + dx, y as isize + dy)))
        })
    }

    /// Square-neighbourhood erosion by `r` pixels; pixels whose neighbourhood
    /// leaves the image are dropped.
    pub fn erode(&self, r: usize) -> Mask {
        let r = r as isize;
        Mask::from_fn(self.width, self.height, |x, y| {
            (-r..=r).all(|dy| (-r..=r).all(|dx| self.get_signed(x as isize + dx, y as isize + dy)))
        })
    }

    /// A coarse pixel is set only when its whole `s x s` block is.
    pub fn pool_all(&self, s: usize) -> Mask {
        let (w, h) = (self.width / s, self.height / s);
        Mask::from_fn(w, h, |x, y| {
            (0..s).all(|dy| (0..s).all(|dx| self.get(x * s + dx, y * s + dy)))
        })
    }
}
