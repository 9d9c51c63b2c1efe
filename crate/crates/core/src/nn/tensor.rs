/// Batch, channel, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense NCHW tensor of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Self {
        assert_eq!(shape.len(), data.len(), "tensor data does not match {shape}");
        Self { shape, data }
    }

    /// Concatenates two tensors along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(
            (a.shape.n, a.shape.h, a.shape.w),
            (b.shape.n, b.shape.h, b.shape.w)
        );
        let shape = Shape::new(a.shape.n, a.shape.c + b.shape.c, a.shape.h, a.shape.w);
        let mut data = Vec::with_capacity(shape.len());
        let (sa, sb) = (a.shape.c * a.shape.plane(), b.shape.c * b.shape.plane());
        for n in 0..shape.n {
            data.extend_from_slice(&a.data[n * sa..(n + 1) * sa]);
            data.extend_from_slice(&b.data[n * sb..(n + 1) * sb]);
        }
        Tensor { shape, data }
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `c` channels and the rest.
    pub fn split_channels(&self, c: usize) -> (Tensor, Tensor) {
        assert!(c <= self.shape.c);
        let plane = self.shape.plane();
        let sa = Shape::new(self.shape.n, c, self.shape.h, self.shape.w);
        let sb = Shape::new(self.shape.n, self.shape.c - c, self.shape.h, self.shape.w);
        let mut a = Vec::with_capacity(sa.len());
        let mut b = Vec::with_capacity(sb.len());
        let per = self.shape.c * plane;
        for n in 0..self.shape.n {
            let item = &self.data[n * per..(n + 1) * per];
            a.extend_from_slice(&item[..c * plane]);
            b.extend_from_slice(&item[c * plane..]);
        }
        (Tensor::from_vec(sa, a), Tensor::from_vec(sb, b))
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// The `index`-th batch item as a single-item tensor.
    pub fn item(&self, index: usize) -> Tensor {
        let per = self.shape.c * self.shape.plane();
        Tensor::from_vec(
            Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            self.data[index * per..(index + 1) * per].to_vec(),
        )
    }

    /// Stacks single-item tensors of equal shape into a batch.
    pub fn stack(items: &[Tensor]) -> Tensor {
        let first = items.first().expect("stack of zero tensors").shape;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            assert_eq!((t.shape.c, t.shape.h, t.shape.w), (first.c, first.h, first.w));
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(
            Shape::new(data.len() / (first.c * first.plane()), first.c, first.h, first.w),
            data,
        )
    }
}
